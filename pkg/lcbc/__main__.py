from lcbc.cli import main

raise SystemExit(main())
