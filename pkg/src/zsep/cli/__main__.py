from zsep.cli import main

main()
