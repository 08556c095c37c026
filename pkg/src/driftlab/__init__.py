# intentionally left blank, for the moment...
