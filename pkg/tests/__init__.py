# Tests package for dp-vger
