# Shared utilities: configuration, errors, logging, numerics and optimizers
