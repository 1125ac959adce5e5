import sys

from dynlsm.cli import main

sys.exit(main())
