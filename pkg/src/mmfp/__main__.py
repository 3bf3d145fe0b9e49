import sys

from mmfp.cli import main

sys.exit(main())
