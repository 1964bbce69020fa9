import sys

from dpxfin.cli import main

sys.exit(main())
