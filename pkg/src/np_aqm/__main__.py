import sys

from np_aqm.cli import main

sys.exit(main())
