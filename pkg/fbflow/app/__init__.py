# fbflow app package
