"""Toy external simulator speaking the one-line JSON protocol.

Reads one request from stdin and prints one response to stdout.
"""
import json
import math
import sys

req = json.loads(sys.stdin.readline())
c = req["config"]
size = c["w1"] * c["nf1"]
gain = 20.0 - 0.5 * (math.log(size) - math.log(6.0)) ** 2
ugb = 1e7 * c["w1"] / (c["w1"] + 2.0)
pm = 50.0 + 4.0 * math.tanh(c["w1"] - 3.0)
if req["fidelity"] == "post":
    gain -= 0.05 * size
    ugb /= 1.0 + 0.01 * size
print(json.dumps({"id": req["id"], "metrics": {"gain_db": gain, "ugb_hz": ugb, "pm_deg": pm}}))
