import sys

from lowrank_ggn.cli import main

sys.exit(main())
