import sys

from m3pipe.cli import main

sys.exit(main())
