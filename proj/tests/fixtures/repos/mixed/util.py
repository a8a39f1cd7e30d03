import os


def load(path):
    """Read a file and return its text."""
    with open(path) as fh:
        return fh.read()


def parse(text):
    def inner(line):
        return line.strip().split(",")

    rows = [inner(l) for l in text.splitlines()]
    return rows

