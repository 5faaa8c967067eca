from moekit.cli import entry

entry()
