"""Modular algorithm induction on a discrete tape machine."""
