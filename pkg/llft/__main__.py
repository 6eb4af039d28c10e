from llft.main import _main
_main()
