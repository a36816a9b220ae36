import sys

from apcloud.cli import main

sys.exit(main())
