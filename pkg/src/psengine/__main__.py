from psengine.cli import main

main()
