import sys

from sgmq.cli import main

sys.exit(main())
