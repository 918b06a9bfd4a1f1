from medreport.cli import main

main()
