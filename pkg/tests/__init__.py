# waveffr test suite
