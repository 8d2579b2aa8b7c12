# Empty init file to make the directory a package