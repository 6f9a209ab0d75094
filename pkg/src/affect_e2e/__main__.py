import sys

from affect_e2e.cli import main

sys.exit(main())
