import sys

from mtdistill.cli import main

sys.exit(main())
