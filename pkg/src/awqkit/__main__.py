import sys

from awqkit.cli import main

sys.exit(main())
