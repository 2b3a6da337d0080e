"""Desk-scale generative audio compression."""
