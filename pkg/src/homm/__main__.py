import sys

from homm.cli import main

sys.exit(main())
