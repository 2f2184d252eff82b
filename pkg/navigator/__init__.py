# Numerical core: tasks, encoder, policy space, supernet, search, decode, evaluation
