import sys

from smokediff.cli import main

sys.exit(main())
