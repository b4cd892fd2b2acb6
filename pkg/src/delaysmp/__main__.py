import sys

from .cli_persistence import main

sys.exit(main())
