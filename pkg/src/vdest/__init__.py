"""Vehicle state estimation for high-speed driving on banked tracks."""

__version__ = "0.1.0"
