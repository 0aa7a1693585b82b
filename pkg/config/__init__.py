# SheetGuard settings: environment, .env and JSON config file
