import sys

from nfcsi.cli import main

sys.exit(main())
