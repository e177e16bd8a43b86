from colde.cli import main

raise SystemExit(main())
