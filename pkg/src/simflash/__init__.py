"""Search-in-Memory flash chip simulator and host index library."""
