"""bronchosim: desk-scale bronchoscopy navigation simulator and staged
multimodal RL training stack (reconstruction pretraining, cross-attention
fusion, PPO)."""

__version__ = "0.1.0"
