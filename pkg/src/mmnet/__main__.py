from mmnet.cli import main

main()
