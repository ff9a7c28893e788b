"""Context-aware vision-language contrastive models for exam-structured fundus data."""

__version__ = "0.1.0"
