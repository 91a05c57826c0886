"""Repository gate scripts for context-debias."""
