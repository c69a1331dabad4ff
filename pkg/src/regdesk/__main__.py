import sys

from regdesk.cli import main

sys.exit(main())
