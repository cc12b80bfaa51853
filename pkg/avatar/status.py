"""
Descriptive process exit codes, for code readability.

Every command of the avatar CLI exits with one of these codes.
"""

# Success - 0
EXIT_0_OK = 0

# Caller errors - 1, 2
EXIT_1_USAGE = 1
EXIT_2_VALIDATION = 2

# Solver / training failures - 3
EXIT_3_NUMERICAL = 3
