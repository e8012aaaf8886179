"""FastAPI service layer: request/response schemas and the app."""
