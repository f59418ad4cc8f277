import sys

from fddf.cli import main

sys.exit(main())
