from lrpdmap.cli import main

main()
