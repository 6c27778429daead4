"""CLI validation utilities."""

import argparse
import math


def positive_int(value: str) -> int:
    """Convert to integer and validate that it is positive"""
    ivalue = int(value)
    if ivalue <= 0:
        raise argparse.ArgumentTypeError(f"{value} is not a positive integer")
    return ivalue


def non_negative_int(value: str) -> int:
    ivalue = int(value)
    if ivalue < 0:
        raise argparse.ArgumentTypeError(f"{value} is not a non-negative integer")
    return ivalue


def positive_float(value: str) -> float:
    """Convert to float and validate that it is finite and positive"""
    try:
        fvalue = float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{value} is not a number")
    if not math.isfinite(fvalue) or fvalue <= 0:
        raise argparse.ArgumentTypeError(f"{value} is not a positive number")
    return fvalue
