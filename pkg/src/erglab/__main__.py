from erglab.cli import main
import sys
sys.exit(main())
