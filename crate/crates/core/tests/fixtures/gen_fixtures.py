"""Regenerate the SSPB/SSFV golden files independently of the Rust code."""
import struct

U32_MAX = 0xFFFFFFFF


def sspb(count, h, w, c, data=b""):
    return b"SSPB" + struct.pack("<4I", count, h, w, c) + data


def ssfv(count, dim, values=()):
    return b"SSFV" + struct.pack("<2I", count, dim) + struct.pack(f"<{len(values)}f", *values)


def write(name, payload):
    with open(name, "wb") as f:
        f.write(payload)


# two 4x3 RGB patches
count, h, w, c = 2, 4, 3, 3
per = h * w * c
pixels = bytes((i * 37 + 11) % 256 for i in range(count * per))
write("sspb_small.bin", sspb(count, h, w, c, pixels))

# loopback reply: each row is the patch's mean byte, repeated dim times
dim = 4
means = [sum(pixels[i * per:(i + 1) * per]) / per for i in range(count)]
write("ssfv_small_loopback.bin", ssfv(count, dim, [m for m in means for _ in range(dim)]))

write("sspb_empty.bin", sspb(0, 224, 224, 3))
write("ssfv_empty.bin", ssfv(0, 1024))

# every header field at the u32 limit the payload size allows (zero bytes)
write("sspb_max_header.bin", sspb(U32_MAX, 0, U32_MAX, U32_MAX))
write("ssfv_max_header.bin", ssfv(U32_MAX, 0))

write("bad_magic.bin", b"SSPX" + struct.pack("<4I", 0, 1, 1, 1))
write("truncated.bin", sspb(1, 2, 2, 3, b"\x00" * 5))
