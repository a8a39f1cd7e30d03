def helper(y):
    return y * 2
