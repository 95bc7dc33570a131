import sys

from csidn.cli import main

sys.exit(main())
