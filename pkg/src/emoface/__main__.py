from emoface.cli import main

raise SystemExit(main())
