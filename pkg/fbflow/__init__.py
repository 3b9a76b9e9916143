# fbflow package
