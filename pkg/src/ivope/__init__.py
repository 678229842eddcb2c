"""Two-stage instrumental-variable off-policy evaluation for confounded linear MDPs."""
