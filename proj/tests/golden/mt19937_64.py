"""Reference MT19937-64 used to produce rng_seed42.txt."""

import sys

NN, MM = 312, 156
MATRIX_A = 0xB5026F5AA96619E9
UM, LM = 0xFFFFFFFF80000000, 0x7FFFFFFF
MASK = (1 << 64) - 1


class MT64:
    def __init__(self, seed):
        self.mt = [0] * NN
        self.mt[0] = seed & MASK
        for i in range(1, NN):
            prev = self.mt[i - 1]
            self.mt[i] = (6364136223846793005 * (prev ^ (prev >> 62)) + i) & MASK
        self.mti = NN

    def _twist(self):
        mag = (0, MATRIX_A)
        for i in range(NN):
            x = (self.mt[i] & UM) | (self.mt[(i + 1) % NN] & LM)
            self.mt[i] = self.mt[(i + MM) % NN] ^ (x >> 1) ^ mag[x & 1]
        self.mti = 0

    def next(self):
        if self.mti >= NN:
            self._twist()
        x = self.mt[self.mti]
        self.mti += 1
        x ^= (x >> 29) & 0x5555555555555555
        x ^= (x << 17) & 0x71D67FFFEDA60000
        x ^= (x << 37) & 0xFFF7EEE000000000
        x ^= x >> 43
        return x & MASK


if __name__ == "__main__":
    seed = int(sys.argv[1]) if len(sys.argv) > 1 else 42
    count = int(sys.argv[2]) if len(sys.argv) > 2 else 64
    g = MT64(seed)
    for _ in range(count):
        print(g.next())
