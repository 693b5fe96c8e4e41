"""Recurrent-event survival benchmark."""
