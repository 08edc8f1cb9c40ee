import sys

from csdm.cli import main

sys.exit(main())
