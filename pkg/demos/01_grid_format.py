"""
Gridded irradiance sequences and the DSRG file format
======================================================

Generate a synthetic cloud-advection sequence, write it to a DSRG file,
read it back, import the same kind of data from CSV and write a PGM preview.
"""
import os
import tempfile

import numpy as np

from dsrnowcast.gridio import (
    HEADER_SIZE, SyntheticParams, build_windows, generate_synthetic, latlon_to_pixel, normalize, pixel_center,
    read_csv, read_sequence, write_pgm, write_sequence,
)

out = tempfile.mkdtemp(prefix="dsr_demo_")

# 48 hourly frames of a 32x48 grid: clear-sky diurnal curve times drifting clouds
params = SyntheticParams(rows=32, cols=48, hours=48, velocity=(0.0, 1.0))
seq = generate_synthetic(params, seed=0)
print("frames:", len(seq), "grid:", seq.shape, "extent:", seq.extent)
print("midday max %.1f W/m^2, midnight max %.1f W/m^2" % (seq[12].values.max(), seq[0].values.max()))

# the file is a fixed header plus, per frame, an i64 timestamp and f32 values
path = os.path.join(out, "synthetic.dsrg")
n = write_sequence(seq, path)
print("wrote %d bytes = %d header + %d frames x (8 + %d)" % (n, HEADER_SIZE, len(seq), seq.shape[0] * seq.shape[1] * 4))
back = read_sequence(path)
print("roundtrip identical:", back == seq)

# values are scaled to [0, 1] for the network; missing pixels become 0
print("normalized range:", normalize(seq[12]).min(), normalize(seq[12]).max())

# six-hour training windows: three inputs, three targets
windows = build_windows(seq)
print("windows:", len(windows), "first input times:", [f.timestamp for f in windows[0].inputs])

# geographic lookup is nearest pixel; row 0 is the northern edge
lat, lon = pixel_center(5, 7, seq.shape, seq.extent)
print("pixel (5, 7) centre: %.3f, %.3f ->" % (lat, lon), latlon_to_pixel(lat, lon, seq.shape, seq.extent))

# CSV interchange: one row per observed pixel, unlisted pixels are missing
csv_path = os.path.join(out, "obs.csv")
with open(csv_path, "w") as fh:
    fh.write("timestamp,row,col,value\n")
    for t in (0, 3600):
        for r in range(2):
            for c in range(3):
                fh.write(f"{t},{r},{c},{100 * r + c}\n")
obs = read_csv(csv_path, 3, 3)
print("imported", len(obs), "frames; missing pixels per frame:", int(np.isnan(obs[0].values).sum()))

pgm = os.path.join(out, "noon.pgm")
write_pgm(seq[12], pgm)
print("preview written to", pgm)
