#!/usr/bin/env python3
"""Batch driver. Examples:

    python demo.py synth --grid 4x4 --cabs 5 --steps 2000 -o fleet.tsv
    python demo.py prepare -i fleet.tsv -o fleet
    python demo.py train -b fleet -o g2e.ckpt --variant G2E --d-loc 24 --d-time 8
    python demo.py eval -c g2e.ckpt -b fleet -o g2e.test --baselines frequency,markov1
"""
import sys

from lightmove.cli import main

if __name__ == '__main__':
    sys.exit(main())
