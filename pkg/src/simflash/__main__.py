import sys

from simflash.cli import main

sys.exit(main())
