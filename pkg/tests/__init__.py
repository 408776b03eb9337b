# Tests for hmfn
