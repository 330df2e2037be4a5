"""How large is the key space, and how many bits is that?

Every M x M block is shuffled by one permutation of its c*M*M values, so
there are (c*M*M)! possible keys. This script prints that count for the
block sizes that divide a 32x32 image.
"""
import math

from keylock import key_space_size
from keylock.keycore import key_space_bits

print(f"{'M':>2} {'c':>2} {'values':>7} {'digits':>7} {'bits':>9}")
for channels in (1, 3):
    for m in (1, 2, 4, 8, 16):
        n = key_space_size(channels, m)
        print(f"{m:>2} {channels:>2} {channels * m * m:>7} {len(str(n)):>7} {key_space_bits(channels, m):>9.1f}")

# The smallest colour case is small enough to write out in full.
print()
print("3 x 2 x 2 block:", key_space_size(3, 2), "=", " * ".join(map(str, range(1, 13))))
assert key_space_size(3, 2) == math.factorial(12)
