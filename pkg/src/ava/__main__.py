import sys

from ava.cli import main

sys.exit(main())
