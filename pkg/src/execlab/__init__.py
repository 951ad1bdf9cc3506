"""Optimal-execution laboratory: Almgren-Chriss markets with time-varying
liquidity, a Double Deep Q-Learning liquidation agent, and classical benchmarks."""

__version__ = "0.1.0"
