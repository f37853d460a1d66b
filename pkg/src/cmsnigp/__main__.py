import sys

from cmsnigp.cli import main

sys.exit(main())
