# src/ - Core modules for the self-distillation OOD detector
# See individual modules for detailed documentation
