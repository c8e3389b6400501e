from memcycle.cli import main

main()
