import sys

from lffn.cli import main

sys.exit(main())
