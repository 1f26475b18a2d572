"""
squashfix: bitflip repair for SquashFS images recovered from raw NAND dumps.

Modules import each other by bare name; run from src/ or put src/ on the path.

Usage:
    python main.py run dump.bin --offset 0xb60000 --work run/
"""
