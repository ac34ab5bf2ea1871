import sys

from rtgov.cli import main

sys.exit(main())
