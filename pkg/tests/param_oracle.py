"""Layer-arithmetic parameter counts for the four reference architectures.

Standalone on purpose: nothing here imports the package. Every count is a
sum of ``out*in*kh*kw (+out)`` terms read off the published configuration
tables, so the graph builder can be checked against numbers it had no part
in producing.

Run directly to print the table::

    python tests/param_oracle.py
"""


def conv(cin, cout, k, bias=True):
    return cout * cin * k * k + (cout if bias else 0)


def fc(cin, cout):
    return cin * cout + cout


def bn(c):
    # gamma and beta; running statistics are buffers, not trainable
    return 2 * c


def alexnet(num_classes=1000):
    # single-tower variant, no local response normalization
    total = 0
    total += conv(3, 64, 11)
    total += conv(64, 192, 5)
    total += conv(192, 384, 3)
    total += conv(384, 256, 3)
    total += conv(256, 256, 3)
    total += fc(256 * 6 * 6, 4096)
    total += fc(4096, 4096)
    total += fc(4096, num_classes)
    return total


def vgg16(num_classes=1000):
    cfg = [64, 64, "M", 128, 128, "M", 256, 256, 256, "M",
           512, 512, 512, "M", 512, 512, 512, "M"]
    total = 0
    cin = 3
    for v in cfg:
        if v == "M":
            continue
        total += conv(cin, v, 3)
        cin = v
    total += fc(512 * 7 * 7, 4096)
    total += fc(4096, 4096)
    total += fc(4096, num_classes)
    return total


def resnet50(num_classes=1000):
    blocks = [3, 4, 6, 3]
    widths = [64, 128, 256, 512]
    expansion = 4
    total = conv(3, 64, 7, bias=False) + bn(64)
    cin = 64
    for n, w in zip(blocks, widths):
        for i in range(n):
            total += conv(cin, w, 1, bias=False) + bn(w)
            total += conv(w, w, 3, bias=False) + bn(w)
            total += conv(w, w * expansion, 1, bias=False) + bn(w * expansion)
            if i == 0:
                total += conv(cin, w * expansion, 1, bias=False) + bn(w * expansion)
            cin = w * expansion
    total += fc(cin, num_classes)
    return total


def densenet121(num_classes=1000):
    growth, bn_size, init = 32, 4, 64
    blocks = [6, 12, 24, 16]
    total = conv(3, init, 7, bias=False) + bn(init)
    c = init
    for b, n in enumerate(blocks):
        for _ in range(n):
            total += bn(c) + conv(c, bn_size * growth, 1, bias=False)
            total += bn(bn_size * growth) + conv(bn_size * growth, growth, 3, bias=False)
            c += growth
        if b != len(blocks) - 1:
            total += bn(c) + conv(c, c // 2, 1, bias=False)
            c //= 2
    total += bn(c)
    total += fc(c, num_classes)
    return total


ORACLE = {
    "alexnet": alexnet,
    "vgg16": vgg16,
    "densenet121": densenet121,
    "resnet50": resnet50,
}


if __name__ == "__main__":
    for name, fn in ORACLE.items():
        print(f"{name:12s} {fn():>12,d}")
