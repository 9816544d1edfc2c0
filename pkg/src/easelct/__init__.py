"""Low-dose CT reconstruction with annealed Langevin score priors and SQS data steps."""
