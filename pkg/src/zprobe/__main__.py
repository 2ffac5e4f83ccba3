import sys

from zprobe.cli import main

sys.exit(main())
