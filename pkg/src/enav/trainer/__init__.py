"""Expert data, supervised fine-tuning and two-stage PPO."""
