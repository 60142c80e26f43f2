from lmrasch.cli import main

main()
