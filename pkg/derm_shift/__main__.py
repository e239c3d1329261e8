import sys

from derm_shift.cli import main

sys.exit(main())
