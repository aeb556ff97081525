from teledex.cli import main

main()
