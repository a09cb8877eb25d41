"""Quantized SWIN inference with a GELU-less (integer ReLU) execution mode.

Modules:
    tensor     float / int8 kernels and symmetric quantization
    autodiff   reverse-mode tape and SGD-with-momentum
    swin       float SWIN transformer
    quant      int8 pipeline with fused-op boundaries, standard and GELU-less modes
    distill    block-by-block GELU->ReLU replacement with knowledge distillation
    bench      latency measurement, fused-op ablation, speedup tables
    cli        command-line entry point (``geluless-swin``)
"""

__version__ = "0.1.0"
