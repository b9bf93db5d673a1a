"""
The hourly forecast service
============================

Start the HTTP service on a free port, push three consecutive hourly frames,
then ask for a point forecast and a full forecast grid.
"""
import json
import threading
import urllib.request

import numpy as np

from dsrnowcast.gridio import HOUR, GridSequence, SyntheticParams, encode_sequence, generate_synthetic, read_sequence
from dsrnowcast.network import NetworkConfig, NowcastModel
from dsrnowcast.serve import ForecastService, make_server

seq = generate_synthetic(SyntheticParams(rows=24, cols=32, hours=12), seed=2)
# untrained tiny models are enough to exercise the service
models = [NowcastModel.initialize(NetworkConfig(24, 32, h, (4,), (3, 3)), seed=h) for h in (1, 2, 3)]
service = ForecastService(models, extent=seq.extent)
server = make_server(service, "127.0.0.1", 0)
threading.Thread(target=server.serve_forever, daemon=True).start()
base = "http://127.0.0.1:%d" % server.server_address[1]
print("serving on", base)


def call(path, body=None):
    req = urllib.request.Request(base + path, data=body, method="POST" if body is not None else "GET")
    try:
        with urllib.request.urlopen(req) as resp:
            return resp.status, resp.read()
    except urllib.error.HTTPError as exc:
        return exc.code, exc.read()


for k in range(6, 9):
    status, body = call("/v1/ingest", encode_sequence(GridSequence((seq[k],))))
    print("ingest frame", k, "->", status, json.loads(body)["status"])

print("health:", json.loads(call("/v1/health")[1]))
lat = (seq.extent[0] + seq.extent[1]) / 2
lon = (seq.extent[2] + seq.extent[3]) / 2
for h in (1, 2, 3):
    status, body = call("/v1/point?lat=%.3f&lon=%.3f&h=%d" % (lat, lon, h))
    print("point t+%d:" % h, json.loads(body))

status, body = call("/v1/grid/2")
grid = read_sequence(body)
print("grid t+2: %d bytes, valid %d h after the last input, mean %.1f W/m^2"
      % (len(body), (grid[0].timestamp - seq[8].timestamp) // HOUR, np.nanmean(grid[0].values)))

# an out-of-order frame is refused and the published forecasts stay put
status, body = call("/v1/ingest", encode_sequence(GridSequence((seq[7],))))
print("stale ingest ->", status, json.loads(body))
server.shutdown()
