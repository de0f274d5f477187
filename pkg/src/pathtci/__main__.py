import sys

from pathtci.cli import main

sys.exit(main())
