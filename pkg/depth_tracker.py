"""
depth-trace: layer-wise depth analysis of a sparse mixture-of-experts
transformer over multi-turn agent trajectories.

    python depth_tracker.py synth --domain code_generation --turns 4 --out traj.json
    python depth_tracker.py analyze --config config/run_example.json
"""
import sys

from depth_pipeline.cli import cli_dispatch

if __name__ == "__main__":
    sys.exit(cli_dispatch())
