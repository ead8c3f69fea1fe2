"""
Benchmarks from Python and from the shell
=========================================

"""

import subprocess
import sys
import tempfile

from ordcut import get_case, run_case

report = run_case(get_case("poisson_square"))
print("poisson oracle residual", round(report["oracle_residual"], 5))
print("checks", report["checks"])

# the same machinery behind the command line; exit code 0 means every check passed
with tempfile.TemporaryDirectory() as out:
    solve = [sys.executable, "-m", "ordcut", "solve", "--problem", "identity_smoke", "--out", out]
    print("solve exit", subprocess.run(solve).returncode)
    verify = [sys.executable, "-m", "ordcut", "verify", "--problem", "identity_smoke",
              "--candidate", f"{out}/levels/sub_3.json"]
    print("verify exit", subprocess.run(verify).returncode)
