from sheetguard.cli import main

main()
