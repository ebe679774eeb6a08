"""
What the extra parameters cost
==============================

Layer-wise quantization stores one 32-bit mantissa, one 6-bit exponent
and one 8-bit zero point per layer: 46 bits.  Per-channel quantization
stores that set for every output channel.  Shift scaling stores the one
set plus a 4-bit shift per channel.

For 3x3 depthwise layers the weights themselves are tiny (9 bytes per
channel), so per-channel parameters are a large fraction of the total.
For 1x1 pointwise layers the weights dominate, more so once pruned
weights are stored in a bitmask sparse format.
"""
from wesq.metrics import LayerGeometry, overhead, param_size

channels = [32, 64, 128, 256, 512, 1024]

print("3x3 depthwise, dense weights")
print(f"{'N':>6} {'lwq bits':>10} {'cwq %':>8} {'wes %':>8}")
for n in channels:
    geo = LayerGeometry.depthwise(3, n)
    base = param_size(geo, "lwq")
    cwq, wes = (100 * overhead(param_size(geo, s), base) for s in ("cwq", "wes"))
    print(f"{n:>6} {base.total_bits:>10} {cwq:>8.2f} {wes:>8.3f}")

print("\n1x1 pointwise N->N, 20% sparsity, 1-bit mask + packed nonzeros + 32-bit count")
print(f"{'N':>6} {'lwq bits':>10} {'cwq %':>8} {'wes %':>8}")
for n in channels:
    geo = LayerGeometry.conv(1, n, n)
    base = param_size(geo, "lwq", 0.2)
    cwq, wes = (100 * overhead(param_size(geo, s, 0.2), base) for s in ("cwq", "wes"))
    print(f"{n:>6} {base.total_bits:>10} {cwq:>8.3f} {wes:>8.4f}")
